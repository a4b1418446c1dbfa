@problemName Broken
@univariate true
@classLabel true a b
@data
1,?,3:a
