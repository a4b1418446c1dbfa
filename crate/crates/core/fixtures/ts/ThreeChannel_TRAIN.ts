@problemName ThreeChannel
@timeStamps false
@missing false
@univariate false
@dimensions 3
@equalLength true
@seriesLength 4
@classLabel true up down flat
@data
1,2,3,4:10,20,30,40:-1,-2,-3,-4:up
4,3,2,1:40,30,20,10:-4,-3,-2,-1:down
# a comment between samples
2,2,2,2:5,5,5,5:0,0,0,0:flat
